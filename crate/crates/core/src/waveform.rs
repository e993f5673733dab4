//! Steering vectors, observation-tensor synthesis, and round-trip-time
//! (RTT) ranging.
//!
//! The received pilot signal, after constant-modulus pilot wipe-off and
//! coherent integration over the OFDM symbols, is a 3-D complex tensor of
//! shape (vertical antennas, horizontal antennas, subcarriers): a sum of
//! rank-1 terms `gain * a_z o a_x o d(toa)` plus circularly-symmetric complex
//! Gaussian noise.
//!
//! Noise bookkeeping: symbol integration is modeled as a noise-variance
//! reduction instead of simulating the individual symbols. With tensor
//! entries normalized so they carry the channel gain directly,
//!
//! ```text
//! N0_eff = (noise_psd_W_per_Hz * subcarrier_spacing * noise_figure_linear)
//!          / (n_symbols * (tx_power_W / subcarriers))
//! ```
//!
//! i.e. per-subcarrier thermal noise power scaled by the noise figure,
//! divided by the coherent integration gain and the per-subcarrier transmit
//! power.

use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use thiserror::Error;

use crate::scene::PathParams;
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error)]
pub enum WaveformError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("tensor dimensions {got:?} do not match configuration {want:?}")]
    DimensionMismatch { got: [usize; 3], want: [usize; 3] },
    #[error("inferred range {0} m is not positive")]
    DegenerateRange(f64),
    #[error("tensor i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed tensor dump: {0}")]
    MalformedDump(String),
}

/// Uniform rectangular array at the RSU.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ArrayConfig {
    /// Horizontal element count.
    pub n_x: usize,
    /// Vertical element count.
    pub n_z: usize,
    /// Horizontal element spacing (m).
    pub d_x: f64,
    /// Vertical element spacing (m).
    pub d_z: f64,
    /// Carrier wavelength (m).
    pub wavelength: f64,
}

impl ArrayConfig {
    pub fn new(n_x: usize, n_z: usize, d_x: f64, d_z: f64, wavelength: f64) -> Result<Self, WaveformError> {
        if n_x < 1 || n_z < 1 {
            return Err(WaveformError::InvalidConfig("element counts must be >= 1".into()));
        }
        if d_x <= 0.0 || d_z <= 0.0 || wavelength <= 0.0 {
            return Err(WaveformError::InvalidConfig(
                "spacings and wavelength must be positive".into(),
            ));
        }
        Ok(Self { n_x, n_z, d_x, d_z, wavelength })
    }

    /// Half-wavelength spaced array.
    pub fn half_wavelength(n_x: usize, n_z: usize, wavelength: f64) -> Result<Self, WaveformError> {
        Self::new(n_x, n_z, wavelength / 2.0, wavelength / 2.0, wavelength)
    }
}

/// OFDM pilot and link-budget parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub subcarriers: usize,
    /// Subcarrier spacing (Hz).
    pub subcarrier_spacing: f64,
    /// Number of coherently integrated OFDM symbols.
    pub n_symbols: usize,
    /// Carrier frequency (Hz).
    pub carrier_freq: f64,
    /// Transmit power (dBm), split evenly over the subcarriers.
    pub tx_power_dbm: f64,
    /// Noise power spectral density (dBm/Hz).
    pub noise_psd_dbm_hz: f64,
    /// Receiver noise figure (dB).
    pub noise_figure_db: f64,
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<(), WaveformError> {
        if self.subcarriers < 2 {
            return Err(WaveformError::InvalidConfig("need at least 2 subcarriers".into()));
        }
        if self.subcarrier_spacing <= 0.0 || self.carrier_freq <= 0.0 || self.n_symbols < 1 {
            return Err(WaveformError::InvalidConfig(
                "spacing, carrier frequency and symbol count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    /// Total active bandwidth (Hz).
    pub fn bandwidth(&self) -> f64 {
        self.subcarriers as f64 * self.subcarrier_spacing
    }

    /// Per-entry complex noise variance after pilot wipe-off, coherent symbol
    /// integration, and normalization by the per-subcarrier amplitude (see
    /// module docs for the formula).
    pub fn effective_noise_variance(&self) -> f64 {
        let psd_w = dbm_to_watts(self.noise_psd_dbm_hz);
        let nf = db_to_linear(self.noise_figure_db);
        let noise_per_subcarrier = psd_w * self.subcarrier_spacing * nf;
        let tx_per_subcarrier = dbm_to_watts(self.tx_power_dbm) / self.subcarriers as f64;
        noise_per_subcarrier / (self.n_symbols as f64 * tx_per_subcarrier)
    }

    /// Post-integration per-entry SNR for a path of given `|gain|^2`.
    pub fn post_integration_snr(&self, gain_power: f64) -> f64 {
        gain_power / self.effective_noise_variance()
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Horizontal steering vector, element n = exp(j 2pi/lambda d_x n cos(el) sin(az)).
pub fn steering_x(array: &ArrayConfig, aoa_az: f64, aoa_el: f64) -> Vec<Complex64> {
    let k = 2.0 * PI / array.wavelength * array.d_x * aoa_el.cos() * aoa_az.sin();
    (0..array.n_x).map(|n| Complex64::from_polar(1.0, k * n as f64)).collect()
}

/// Vertical steering vector, element n = exp(j 2pi/lambda d_z n sin(el)).
pub fn steering_z(array: &ArrayConfig, _aoa_az: f64, aoa_el: f64) -> Vec<Complex64> {
    let k = 2.0 * PI / array.wavelength * array.d_z * aoa_el.sin();
    (0..array.n_z).map(|n| Complex64::from_polar(1.0, k * n as f64)).collect()
}

/// Frequency-domain steering vector, element kappa = exp(-j 2pi kappa df toa).
pub fn delay_steering(ofdm: &OfdmConfig, toa: f64) -> Vec<Complex64> {
    delay_steering_n(ofdm.subcarriers, ofdm.subcarrier_spacing, toa)
}

pub(crate) fn delay_steering_n(len: usize, spacing: f64, toa: f64) -> Vec<Complex64> {
    let w = -2.0 * PI * spacing * toa;
    (0..len).map(|k| Complex64::from_polar(1.0, w * k as f64)).collect()
}

/// Noisy observation tensor of shape (n_z, n_x, subcarriers).
#[derive(Debug, Clone)]
pub struct ObservationTensor {
    pub data: Array3<Complex64>,
    /// Per-entry complex noise variance used during synthesis.
    pub noise_variance: f64,
}

impl ObservationTensor {
    pub fn check_dims(&self, array: &ArrayConfig, ofdm: &OfdmConfig) -> Result<(), WaveformError> {
        let got = self.data.dim();
        let got = [got.0, got.1, got.2];
        let want = [array.n_z, array.n_x, ofdm.subcarriers];
        if got != want {
            return Err(WaveformError::DimensionMismatch { got, want });
        }
        Ok(())
    }

    /// Writes the documented little-endian debug dump: three u64 dimensions
    /// (n_z, n_x, subcarriers) followed by interleaved re/im f64 pairs in
    /// row-major (z, x, subcarrier) order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), WaveformError> {
        let (nz, nx, s) = self.data.dim();
        for d in [nz, nx, s] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.data.iter() {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump produced by [`write_binary`](Self::write_binary).
    /// The noise variance is not part of the dump format.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Array3<Complex64>, WaveformError> {
        let mut u = [0u8; 8];
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            r.read_exact(&mut u)?;
            *d = u64::from_le_bytes(u) as usize;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| WaveformError::MalformedDump("dimension overflow".into()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u)?;
            let re = f64::from_le_bytes(u);
            r.read_exact(&mut u)?;
            let im = f64::from_le_bytes(u);
            data.push(Complex64::new(re, im));
        }
        Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
            .map_err(|e| WaveformError::MalformedDump(e.to_string()))
    }
}

/// Synthesizes the observation tensor for a path list with the link-budget
/// noise variance. Deterministic given the seed; an empty path list yields a
/// noise-only tensor.
pub fn synthesize(
    paths: &[PathParams],
    array: &ArrayConfig,
    ofdm: &OfdmConfig,
    seed: u64,
) -> Result<ObservationTensor, WaveformError> {
    synthesize_with_noise_variance(paths, array, ofdm, ofdm.effective_noise_variance(), seed)
}

/// [`synthesize`] with an explicit per-entry noise variance (0 for a
/// noiseless tensor).
pub fn synthesize_with_noise_variance(
    paths: &[PathParams],
    array: &ArrayConfig,
    ofdm: &OfdmConfig,
    noise_variance: f64,
    seed: u64,
) -> Result<ObservationTensor, WaveformError> {
    ofdm.validate()?;
    if noise_variance < 0.0 {
        return Err(WaveformError::InvalidConfig("negative noise variance".into()));
    }
    let (nz, nx, s) = (array.n_z, array.n_x, ofdm.subcarriers);
    let mut data = Array3::<Complex64>::zeros((nz, nx, s));
    for p in paths {
        let az_vec = steering_z(array, p.aoa_az, p.aoa_el);
        let ax_vec = steering_x(array, p.aoa_az, p.aoa_el);
        let d_vec = delay_steering(ofdm, p.toa);
        for (iz, az) in az_vec.iter().enumerate() {
            for (ix, ax) in ax_vec.iter().enumerate() {
                let zx = p.gain * az * ax;
                for (is, d) in d_vec.iter().enumerate() {
                    data[(iz, ix, is)] += zx * d;
                }
            }
        }
    }
    if noise_variance > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = (noise_variance / 2.0).sqrt();
        for v in data.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(sigma * re, sigma * im);
        }
    }
    Ok(ObservationTensor { data, noise_variance })
}

/// One two-way timing exchange.
///
/// `toa_request` is the CRU-side arrival timestamp of the downlink request in
/// the CRU clock, so it carries the CRU clock bias. `toa_response` is the
/// round-trip interval measured entirely in the RSU clock, from request
/// transmission to response arrival; the bias cancels structurally and never
/// enters it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RttExchange {
    /// CRU-side request ToA in the CRU clock (s).
    pub toa_request: f64,
    /// RSU-side request-to-response round trip (s).
    pub toa_response: f64,
    /// Known CRU turnaround time (s), non-negative.
    pub processing_time: f64,
    /// CRU clock bias relative to the RSU (s); bookkeeping only.
    pub clock_bias: f64,
}

impl RttExchange {
    /// Builds an exchange from per-link timings. `downlink_toa` is the CRU's
    /// (noisy) estimate of the request flight time; `uplink_toa` is the
    /// RSU's (noisy) estimate of the response flight time. The CRU schedules
    /// its response `processing_time` after its measured arrival, so its
    /// timing error rides along into the round trip; the clock bias appears
    /// in the request timestamp only.
    pub fn from_link_timing(
        downlink_toa: f64,
        uplink_toa: f64,
        processing_time: f64,
        clock_bias: f64,
    ) -> Self {
        Self {
            toa_request: downlink_toa + clock_bias,
            toa_response: downlink_toa + processing_time + uplink_toa,
            processing_time,
            clock_bias,
        }
    }
}

/// One-way range from an RTT exchange: `c (round_trip - processing_time) / 2`.
/// The clock bias does not appear in the result.
pub fn rtt_range(exchange: &RttExchange) -> Result<f64, WaveformError> {
    let range = SPEED_OF_LIGHT * (exchange.toa_response - exchange.processing_time) / 2.0;
    if range <= 0.0 {
        return Err(WaveformError::DegenerateRange(range));
    }
    Ok(range)
}
