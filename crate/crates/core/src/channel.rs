//! Long-term channel statistics and channel realisations.
//!
//! Every covariance follows the clustered ULA model
//! `C = α Σ_n (ν_n / N_ray) Σ_m x(θ_{n,m}) x(θ_{n,m})ᴴ`
//! with the distance-dependent gain `10 log10 α = 78.7 − 37.6 log10 δ`.
//! The BS–RIS channel is `T = T̄ + √β R_RIS^{1/2} W R_Tx^{1/2,H}` with a rank-one
//! line-of-sight part `T̄ = √(1−β) T′`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, real, CMat, CVec, C64};
use crate::stats::PhaseState;

/// Cluster centres are drawn on `[-CLUSTER_SPREAD, CLUSTER_SPREAD]`.
pub const CLUSTER_SPREAD: f64 = PI / 3.0;
/// Per-ray offset half-width around its cluster centre.
pub const RAY_OFFSET: f64 = 2.0 * PI / 180.0;
/// Users closer than this to a node are pushed out to it.
pub const MIN_LINK_DISTANCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// BS antennas.
    #[serde(rename = "M")]
    pub antennas: usize,
    /// RIS elements.
    #[serde(rename = "N")]
    pub ris_elements: usize,
    /// Single-antenna users.
    #[serde(rename = "K")]
    pub users: usize,
    /// Distance from the BS to the centre of the user disc, metres.
    #[serde(rename = "D")]
    pub distance: f64,
    pub user_radius: f64,
    pub ris_position: [f64; 2],
    pub beta: f64,
    pub n_path: usize,
    pub n_ray: usize,
    /// Added to every link gain in dB; zero keeps the plain distance law.
    #[serde(default)]
    pub gain_offset_db: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            antennas: 8,
            ris_elements: 16,
            users: 3,
            distance: 30.0,
            user_radius: 50.0,
            ris_position: [50.0, 10.0],
            beta: 0.2,
            n_path: 6,
            n_ray: 20,
            gain_offset_db: -35.0,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 {
            return Err(Error::Config("M must be positive".into()));
        }
        if self.users == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta = {} outside [0, 1]", self.beta)));
        }
        if self.n_path == 0 || self.n_ray == 0 {
            return Err(Error::Config("n_path and n_ray must be at least 1".into()));
        }
        if !(self.distance.is_finite() && self.distance >= 0.0) {
            return Err(Error::Config(format!("D = {} is not a distance", self.distance)));
        }
        if !(self.user_radius.is_finite() && self.user_radius >= 0.0) {
            return Err(Error::Config(format!(
                "user_radius = {} is not a distance",
                self.user_radius
            )));
        }
        if !self.gain_offset_db.is_finite() {
            return Err(Error::Config("gain_offset_db must be finite".into()));
        }
        if self.ris_elements > 0 && self.ris_position == [0.0, 0.0] {
            return Err(Error::Config("RIS cannot be co-located with the BS".into()));
        }
        Ok(())
    }

    /// Zero-forcing needs at least as many antennas as users.
    pub fn validate_zf(&self) -> Result<()> {
        if self.antennas < self.users {
            return Err(Error::Config(format!(
                "zero-forcing needs M >= K (M = {}, K = {})",
                self.antennas, self.users
            )));
        }
        Ok(())
    }
}

/// ULA steering vector, entry `m` is `exp(jπ m sin θ)`.
pub fn steering_vector(angle: f64, length: usize) -> CVec {
    let s = angle.sin();
    CVec::from_fn(length, |m, _| C64::from_polar(1.0, PI * m as f64 * s))
}

/// Large-scale gain `10^((78.7 − 37.6 log10 d) / 10)`.
pub fn pathloss_db_to_linear(distance: f64) -> Result<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(Error::Domain(format!("distance must be positive, got {distance}")));
    }
    Ok(10f64.powf((78.7 - 37.6 * distance.log10()) / 10.0))
}

/// Angular description of one clustered link.
#[derive(Debug, Clone)]
pub struct ClusterGeometry {
    /// Normalised cluster powers `ν_n`.
    pub powers: Vec<f64>,
    /// `angles[n][m]` is the arrival angle of ray `m` in cluster `n`.
    pub angles: Vec<Vec<f64>>,
}

impl ClusterGeometry {
    /// Centres uniform on `[-π/3, π/3]`, rays within ±2°, powers uniform on
    /// `(0, 1]` normalised to unit sum.
    pub fn random<R: Rng + ?Sized>(n_path: usize, n_ray: usize, rng: &mut R) -> Self {
        let mut powers: Vec<f64> = (0..n_path).map(|_| 1.0 - rng.random::<f64>()).collect();
        let total: f64 = powers.iter().sum();
        powers.iter_mut().for_each(|p| *p /= total);
        let angles = (0..n_path)
            .map(|_| {
                let centre = rng.random_range(-CLUSTER_SPREAD..=CLUSTER_SPREAD);
                (0..n_ray)
                    .map(|_| centre + rng.random_range(-RAY_OFFSET..=RAY_OFFSET))
                    .collect()
            })
            .collect();
        Self { powers, angles }
    }
}

/// `α Σ_n (ν_n/N_ray) Σ_m x xᴴ` for the given cluster geometry.
pub fn covariance_from_clusters(geom: &ClusterGeometry, alpha: f64, dims: usize) -> Result<CMat> {
    let mut acc = CMat::zeros(dims, dims);
    for (nu, rays) in geom.powers.iter().zip(&geom.angles) {
        if *nu <= 0.0 {
            return Err(Error::Domain(format!("cluster power must be positive, got {nu}")));
        }
        let w = real(alpha * nu / rays.len() as f64);
        for &theta in rays {
            let x = steering_vector(theta, dims);
            acc += (&x * x.adjoint()) * w;
        }
    }
    linalg::psd_repair(&acc)
}

/// Draws a fresh cluster geometry and returns its covariance.
pub fn synthesize_covariance<R: Rng + ?Sized>(
    alpha: f64,
    dims: usize,
    n_path: usize,
    n_ray: usize,
    rng: &mut R,
) -> Result<CMat> {
    let geom = ClusterGeometry::random(n_path, n_ray, rng);
    covariance_from_clusters(&geom, alpha, dims)
}

#[derive(Debug, Clone)]
pub struct StatisticalModel {
    pub cd: Vec<CMat>,
    pub cr: Vec<CMat>,
    pub rris: CMat,
    pub rtx: CMat,
    /// LoS part, already scaled by `√(1−β)`.
    pub tbar: CMat,
    pub beta: f64,
    /// User positions the covariances were generated for (metres).
    pub user_positions: Vec<[f64; 2]>,
}

impl StatisticalModel {
    pub fn antennas(&self) -> usize {
        self.rtx.nrows()
    }

    pub fn ris_elements(&self) -> usize {
        self.rris.nrows()
    }

    pub fn users(&self) -> usize {
        self.cd.len()
    }

    /// The same scenario with the RIS removed (`N = 0`).
    pub fn without_ris(&self) -> Self {
        let m = self.antennas();
        Self {
            cd: self.cd.clone(),
            cr: vec![CMat::zeros(0, 0); self.users()],
            rris: CMat::zeros(0, 0),
            rtx: self.rtx.clone(),
            tbar: CMat::zeros(0, m),
            beta: self.beta,
            user_positions: self.user_positions.clone(),
        }
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let (m, n) = (self.antennas(), self.ris_elements());
        let bad = |what: &str| Err(Error::Dimension(what.to_string()));
        if self.cr.len() != self.cd.len() {
            return bad("Cd and Cr user counts differ");
        }
        if self.cd.iter().any(|c| c.shape() != (m, m)) {
            return bad("Cd must be MxM");
        }
        if self.cr.iter().any(|c| c.shape() != (n, n)) {
            return bad("Cr must be NxN");
        }
        if self.rtx.shape() != (m, m) || self.rris.shape() != (n, n) {
            return bad("R_Tx must be MxM and R_RIS NxN");
        }
        if self.tbar.shape() != (n, m) {
            return bad("T-bar must be NxM");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta = {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }

    /// Dimensions plus Hermitian/PSD checks on every covariance.
    pub fn validate(&self) -> Result<()> {
        self.check_dimensions()?;
        let all = self.cd.iter().chain(self.cr.iter()).chain([&self.rris, &self.rtx]);
        for c in all {
            if c.nrows() == 0 {
                continue;
            }
            let defect = linalg::hermitian_defect(c);
            if defect > 1e-12 {
                return Err(Error::Numerical(format!("covariance not Hermitian ({defect:e})")));
            }
            let tol = linalg::psd_tolerance(c);
            let min = linalg::min_eigenvalue(c);
            if min < -tol {
                return Err(Error::NotPsd {
                    min_eigenvalue: min,
                    tolerance: tol,
                });
            }
        }
        Ok(())
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sqrt()
        .max(MIN_LINK_DISTANCE)
}

/// Builds the statistical model for one scenario draw.
///
/// Draw order is fixed: user positions, direct covariances, then (only when
/// `N > 0`) `R_Tx`, `R_RIS` and the RIS–user covariances. The direct-link
/// statistics therefore do not depend on `N`.
pub fn build_statistical_model<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<StatisticalModel> {
    config.validate()?;
    let (m, n, k) = (config.antennas, config.ris_elements, config.users);
    let bs = [0.0, 0.0];
    let ris = config.ris_position;
    let offset = 10f64.powf(config.gain_offset_db / 10.0);
    let gain = |a: [f64; 2], b: [f64; 2]| pathloss_db_to_linear(distance(a, b)).map(|g| g * offset);

    let user_positions: Vec<[f64; 2]> = (0..k)
        .map(|_| {
            let r = config.user_radius * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..2.0 * PI);
            [config.distance + r * a.cos(), r * a.sin()]
        })
        .collect();

    let mut cd = Vec::with_capacity(k);
    for pos in &user_positions {
        let alpha = gain(bs, *pos)?;
        cd.push(synthesize_covariance(alpha, m, config.n_path, config.n_ray, rng)?);
    }

    if n == 0 {
        return Ok(StatisticalModel {
            cd,
            cr: vec![CMat::zeros(0, 0); k],
            rris: CMat::zeros(0, 0),
            rtx: synthesize_covariance(1.0, m, config.n_path, config.n_ray, rng)?,
            tbar: CMat::zeros(0, m),
            beta: config.beta,
            user_positions,
        });
    }

    let alpha_t = gain(bs, ris)?;
    // The BS–RIS gain is carried once: by R_RIS on the NLoS side, by T′ on the LoS side.
    let rtx = synthesize_covariance(1.0, m, config.n_path, config.n_ray, rng)?;
    let rris = synthesize_covariance(alpha_t, n, config.n_path, config.n_ray, rng)?;
    let mut cr = Vec::with_capacity(k);
    for pos in &user_positions {
        let alpha = gain(ris, *pos)?;
        cr.push(synthesize_covariance(alpha, n, config.n_path, config.n_ray, rng)?);
    }

    let theta_bs = ris[1].atan2(ris[0]);
    let theta_ris = (-ris[1]).atan2(-ris[0]);
    let t_prime = (steering_vector(theta_ris, n) * steering_vector(theta_bs, m).adjoint()) * real(alpha_t.sqrt());
    let tbar = t_prime * real((1.0 - config.beta).sqrt());

    Ok(StatisticalModel {
        cd,
        cr,
        rris,
        rtx,
        tbar,
        beta: config.beta,
        user_positions,
    })
}

/// Circularly-symmetric standard complex Gaussian, `E|x|² = 1`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
}

pub fn complex_gaussian_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> CVec {
    CVec::from_fn(len, |_, _| complex_gaussian(rng))
}

pub fn complex_gaussian_mat<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    // Fill order is column-major, matching nalgebra's from_fn traversal.
    CMat::from_fn(rows, cols, |_, _| complex_gaussian(rng))
}

/// One realisation of all channel components.
#[derive(Debug, Clone)]
pub struct ChannelSample {
    pub hd: Vec<CVec>,
    pub r: Vec<CVec>,
    pub w: CMat,
    pub t: CMat,
    /// Effective channels for the phase state used at sampling time.
    pub h: Vec<CVec>,
}

impl ChannelSample {
    /// `h_k = h_{d,k} + Tᴴ Φ r_k` for another phase state, reusing the draw.
    pub fn effective_channels(&self, phase: &PhaseState) -> Vec<CVec> {
        assemble(&self.hd, &self.r, &self.t, phase)
    }
}

fn assemble(hd: &[CVec], r: &[CVec], t: &CMat, phase: &PhaseState) -> Vec<CVec> {
    hd.iter()
        .zip(r)
        .map(|(hd, r)| {
            if r.is_empty() {
                hd.clone()
            } else {
                let phr = r.component_mul(&phase.phi);
                hd + t.adjoint() * phr
            }
        })
        .collect()
}

/// Caches the matrix square roots needed to draw realisations of a model.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    cd_sqrt: Vec<CMat>,
    cr_sqrt: Vec<CMat>,
    rris_sqrt: CMat,
    rtx_sqrt: CMat,
    tbar: CMat,
    beta: f64,
}

impl ChannelSampler {
    pub fn new(model: &StatisticalModel) -> Result<Self> {
        model.check_dimensions()?;
        Ok(Self {
            cd_sqrt: model.cd.iter().map(linalg::psd_sqrt).collect::<Result<_>>()?,
            cr_sqrt: model.cr.iter().map(linalg::psd_sqrt).collect::<Result<_>>()?,
            rris_sqrt: linalg::psd_sqrt(&model.rris)?,
            rtx_sqrt: linalg::psd_sqrt(&model.rtx)?,
            tbar: model.tbar.clone(),
            beta: model.beta,
        })
    }

    /// Draw order: `h_d` for every user, `r` for every user, then `W`.
    pub fn sample<R: Rng + ?Sized>(&self, phase: &PhaseState, rng: &mut R) -> ChannelSample {
        let hd = self.sample_direct(rng);
        self.sample_ris(hd, phase, rng)
    }

    /// Direct links from one stream and RIS links from another, so that the
    /// direct-link draws do not depend on `N`.
    pub fn sample_split<R1, R2>(&self, phase: &PhaseState, direct: &mut R1, ris: &mut R2) -> ChannelSample
    where
        R1: Rng + ?Sized,
        R2: Rng + ?Sized,
    {
        let hd = self.sample_direct(direct);
        self.sample_ris(hd, phase, ris)
    }

    fn sample_direct<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<CVec> {
        let m = self.rtx_sqrt.nrows();
        self.cd_sqrt.iter().map(|s| s * complex_gaussian_vec(m, rng)).collect()
    }

    fn sample_ris<R: Rng + ?Sized>(&self, hd: Vec<CVec>, phase: &PhaseState, rng: &mut R) -> ChannelSample {
        let m = self.rtx_sqrt.nrows();
        let n = self.rris_sqrt.nrows();
        let r: Vec<CVec> = self.cr_sqrt.iter().map(|s| s * complex_gaussian_vec(n, rng)).collect();
        let w = complex_gaussian_mat(n, m, rng);
        let t = if n == 0 {
            CMat::zeros(0, m)
        } else if self.beta == 0.0 {
            self.tbar.clone()
        } else {
            &self.tbar + (&self.rris_sqrt * &w * self.rtx_sqrt.adjoint()) * real(self.beta.sqrt())
        };
        let h = assemble(&hd, &r, &t, phase);
        ChannelSample { hd, r, w, t, h }
    }
}

/// One-off draw; prefer [`ChannelSampler`] for repeated sampling.
pub fn sample_channel<R: Rng + ?Sized>(
    model: &StatisticalModel,
    phase: &PhaseState,
    rng: &mut R,
) -> Result<ChannelSample> {
    Ok(ChannelSampler::new(model)?.sample(phase, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius, trace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn steering_examples() {
        let v = steering_vector(0.0, 4);
        assert!(v.iter().all(|z| (z - real(1.0)).norm() < 1e-15));
        let v = steering_vector(PI / 2.0, 2);
        assert!((v[0] - real(1.0)).norm() < 1e-15);
        assert!((v[1] - real(-1.0)).norm() < 1e-12);
        let v = steering_vector(0.3, 8);
        for (m, z) in v.iter().enumerate() {
            assert!((z.norm() - 1.0).abs() < 1e-15);
            let expected = C64::from_polar(1.0, PI * m as f64 * 0.3f64.sin());
            assert!((z - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn pathloss_examples() {
        let g1 = pathloss_db_to_linear(1.0).unwrap();
        assert!((g1 / 10f64.powf(7.87) - 1.0).abs() < 1e-12);
        let g10 = pathloss_db_to_linear(10.0).unwrap();
        assert!((g10 / 10f64.powf(4.11) - 1.0).abs() < 1e-12);
        let g100 = pathloss_db_to_linear(100.0).unwrap();
        assert!((g100 / 10f64.powf(0.35) - 1.0).abs() < 1e-12);
        assert!(pathloss_db_to_linear(0.0).is_err());
        assert!(pathloss_db_to_linear(-3.0).is_err());
    }

    #[test]
    fn single_ray_covariance_is_all_ones() {
        let geom = ClusterGeometry {
            powers: vec![1.0],
            angles: vec![vec![0.0]],
        };
        let c = covariance_from_clusters(&geom, 1.0, 2).unwrap();
        assert!(frobenius(&(c - CMat::from_element(2, 2, real(1.0)))) < 1e-15);
    }

    #[test]
    fn covariance_trace_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let geom = ClusterGeometry::random(6, 20, &mut rng);
            let alpha = 3.7;
            let c = covariance_from_clusters(&geom, alpha, 4).unwrap();
            let expected = alpha * 4.0 * geom.powers.iter().sum::<f64>();
            assert!((trace(&c).re / expected - 1.0).abs() < 1e-10);
            assert_eq!(linalg::hermitian_defect(&c), 0.0);
            assert!(linalg::min_eigenvalue(&c) >= -linalg::psd_tolerance(&c));
        }
    }

    #[test]
    fn cluster_angles_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ClusterGeometry::random(6, 20, &mut rng);
        assert!((g.powers.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.powers.iter().all(|&p| p > 0.0));
        for rays in &g.angles {
            for a in rays {
                assert!(a.abs() <= CLUSTER_SPREAD + RAY_OFFSET + 1e-12);
            }
        }
    }

    #[test]
    fn beta_one_removes_los() {
        let cfg = ScenarioConfig {
            beta: 1.0,
            ..ScenarioConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = build_statistical_model(&cfg, &mut rng).unwrap();
        assert!(model.tbar.iter().all(|z| *z == C64::new(0.0, 0.0)));
    }

    #[test]
    fn beta_zero_los_is_rank_one() {
        let cfg = ScenarioConfig {
            beta: 0.0,
            ..ScenarioConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = build_statistical_model(&cfg, &mut rng).unwrap();
        let sv = model.tbar.clone().svd(false, false).singular_values;
        assert!(sv[0] > 0.0);
        assert!(sv.iter().skip(1).all(|&s| s < 1e-9 * sv[0]));
        let fro2 = frobenius(&model.tbar).powi(2);
        let alpha_t = pathloss_db_to_linear(distance([0.0, 0.0], cfg.ris_position)).unwrap()
            * 10f64.powf(cfg.gain_offset_db / 10.0);
        assert!((fro2 / (alpha_t * 16.0 * 8.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn default_model_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = build_statistical_model(&ScenarioConfig::default(), &mut rng).unwrap();
        model.validate().unwrap();
        assert_eq!(model.cd.len(), 3);
        assert_eq!(model.tbar.shape(), (16, 8));
    }

    #[test]
    fn direct_statistics_do_not_depend_on_ris_size() {
        let base = ScenarioConfig::default();
        let no_ris = ScenarioConfig {
            ris_elements: 0,
            ..base.clone()
        };
        let a = build_statistical_model(&base, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_statistical_model(&no_ris, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (x, y) in a.cd.iter().zip(&b.cd) {
            assert_eq!(x, y);
        }
        assert_eq!(a.user_positions, b.user_positions);
    }

    #[test]
    fn config_validation() {
        let with = |f: fn(&mut ScenarioConfig)| {
            let mut cfg = ScenarioConfig::default();
            f(&mut cfg);
            cfg
        };
        assert!(with(|c| c.beta = 1.5).validate().is_err());
        assert!(with(|c| c.n_ray = 0).validate().is_err());
        let cfg = with(|c| c.users = 9);
        assert!(cfg.validate().is_ok());
        assert!(cfg.validate_zf().is_err());
    }

    #[test]
    fn silent_channels_give_zero_effective_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = build_statistical_model(
            &ScenarioConfig {
                beta: 0.0,
                ..ScenarioConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        for c in model.cd.iter_mut() {
            c.fill(real(0.0));
        }
        for c in model.cr.iter_mut() {
            c.fill(real(0.0));
        }
        let phase = PhaseState::from_angles(vec![0.3; 16]);
        let s = sample_channel(&model, &phase, &mut rng).unwrap();
        assert!(s.h.iter().all(|h| h.norm() == 0.0));
    }

    #[test]
    fn beta_zero_makes_t_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = build_statistical_model(
            &ScenarioConfig {
                beta: 0.0,
                ..ScenarioConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let sampler = ChannelSampler::new(&model).unwrap();
        let phase = PhaseState::zeros(16);
        let a = sampler.sample(&phase, &mut rng);
        let b = sampler.sample(&phase, &mut rng);
        assert_eq!(a.t, model.tbar);
        assert_eq!(b.t, model.tbar);
    }
}
