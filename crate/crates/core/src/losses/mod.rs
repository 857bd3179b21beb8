//! Training objective of the tokenizer: L1 reconstruction, the tap-based
//! perceptual family with its semantic ratio, hinge adversarial terms and
//! per-phase assembly.

mod proxy;

pub use proxy::{ProxyCheckpoint, ProxyConfig, ProxyFeatures, ProxyNet, Tap};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoenc::Phase;
use crate::error::{Error, Result};
use crate::quantizer::{
    entropy_regularizer, vq_latent_losses, EntropySign, LatentGrid, QuantizedGrid, UsageDistribution, DEFAULT_BETA,
    DEFAULT_GAMMA,
};

/// Shallow-to-deep taps without the logit.
pub const LOW_TAPS: [Tap; 5] = [Tap::Stage1, Tap::Stage2, Tap::Stage3, Tap::Stage4, Tap::Stage5];
/// Deepest spatial tap plus the logit.
pub const SEM_TAPS: [Tap; 2] = [Tap::Stage5, Tap::Logit];

/// Default generator weight of the hinge adversarial term.
pub const DEFAULT_LAMBDA_ADV: f64 = 0.1;

/// Named tap subsets compared in the perceptual-layer ablation.
pub fn tap_variants() -> Vec<(&'static str, Vec<Tap>)> {
    use Tap::*;
    vec![
        ("low", LOW_TAPS.to_vec()),
        ("A", vec![Stage1, Stage2, Stage3, Stage4, Stage5, Logit]),
        ("B", vec![Stage2, Stage3, Stage4, Stage5, Logit]),
        ("C", vec![Stage3, Stage4, Stage5, Logit]),
        ("D", vec![Stage4, Stage5, Logit]),
        ("sem", SEM_TAPS.to_vec()),
        ("E", vec![Logit]),
    ]
}

/// Which taps the perceptual term uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PerceptualSpec {
    /// `alpha * L_sem + (1 - alpha) * L_low`.
    Ratio { alpha: f64 },
    /// A fixed tap set, each tap weighted equally.
    Taps { taps: Vec<Tap> },
}

impl PerceptualSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PerceptualSpec::Ratio { alpha } => check_alpha(*alpha),
            PerceptualSpec::Taps { taps } if taps.is_empty() => {
                Err(Error::Config("perceptual loss needs at least one tap".into()))
            }
            PerceptualSpec::Taps { .. } => Ok(()),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("semantic ratio {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Mean squared difference of one tap, i.e. `||a - b||^2 / (H W C)`,
/// averaged over the batch.
pub fn tap_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("tap shapes {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Sum of per-tap distances between two feature stacks.
pub fn perceptual_from_features(fx: &ProxyFeatures, fy: &ProxyFeatures, taps: &[Tap]) -> Result<Tensor> {
    if taps.is_empty() {
        return Err(Error::Config("perceptual loss needs at least one tap".into()));
    }
    let mut total: Option<Tensor> = None;
    for &t in taps {
        let d = tap_distance(fx.tap(t), fy.tap(t))?;
        total = Some(match total {
            None => d,
            Some(s) => (s + d)?,
        });
    }
    Ok(total.unwrap())
}

pub fn perceptual_loss(net: &ProxyNet, x: &Tensor, x_hat: &Tensor, taps: &[Tap]) -> Result<Tensor> {
    let fx = net.features(&x.detach())?;
    let fy = net.features(x_hat)?;
    perceptual_from_features(&fx, &fy, taps)
}

/// Semantic-ratio interpolation between the low and semantic tap sets.
/// At the endpoints only the surviving term is evaluated.
pub fn alpha_from_features(fx: &ProxyFeatures, fy: &ProxyFeatures, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return perceptual_from_features(fx, fy, &LOW_TAPS);
    }
    if alpha == 1.0 {
        return perceptual_from_features(fx, fy, &SEM_TAPS);
    }
    let sem = perceptual_from_features(fx, fy, &SEM_TAPS)?;
    let low = perceptual_from_features(fx, fy, &LOW_TAPS)?;
    Ok(((sem * alpha)? + (low * (1.0 - alpha))?)?)
}

pub fn alpha_perceptual(net: &ProxyNet, x: &Tensor, x_hat: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    let fx = net.features(&x.detach())?;
    let fy = net.features(x_hat)?;
    alpha_from_features(&fx, &fy, alpha)
}

pub fn spec_perceptual(net: &ProxyNet, x: &Tensor, x_hat: &Tensor, spec: &PerceptualSpec) -> Result<Tensor> {
    match spec {
        PerceptualSpec::Ratio { alpha } => alpha_perceptual(net, x, x_hat, *alpha),
        PerceptualSpec::Taps { taps } => perceptual_loss(net, x, x_hat, taps),
    }
}

/// `E[relu(1 - D(real))] + E[relu(1 + D(fake))]`.
pub fn hinge_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let r = (1.0 - real_logits)?.relu()?.mean_all()?;
    let f = (fake_logits + 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// `-E[D(fake)]`.
pub fn hinge_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.mean_all()?.neg()?)
}

/// Generator and discriminator hinge losses for one batch. The
/// discriminator term sees the fake images detached.
pub fn adversarial_losses(
    disc: &crate::autoenc::Discriminator,
    real: &Tensor,
    fake: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = hinge_g_loss(&disc.forward(fake)?)?;
    let d = hinge_d_loss(&disc.forward(&real.detach())?, &disc.forward(&fake.detach())?)?;
    Ok((g, d))
}

/// Weights of the tokenizer objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub perceptual: PerceptualSpec,
    pub beta: f64,
    pub gamma: f64,
    pub entropy_sign: EntropySign,
    pub lambda_adv: f64,
    /// Fraction of the run during which the adversarial term stays off.
    pub adv_warmup: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::phase1()
    }
}

impl LossConfig {
    pub fn phase1() -> Self {
        Self {
            perceptual: PerceptualSpec::Ratio { alpha: 1.0 },
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            entropy_sign: EntropySign::Maximize,
            lambda_adv: DEFAULT_LAMBDA_ADV,
            adv_warmup: 0.2,
        }
    }

    pub fn phase2() -> Self {
        Self {
            perceptual: PerceptualSpec::Ratio { alpha: 0.0 },
            ..Self::phase1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.perceptual.validate()?;
        if self.beta < 0.0 || self.gamma < 0.0 || self.lambda_adv < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.adv_warmup) {
            return Err(Error::Config("adversarial warm-up must be a fraction".into()));
        }
        Ok(())
    }
}

/// Scalar loss components; `total` is their documented weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_l1: f64,
    pub codebook_term: f64,
    /// Already multiplied by beta.
    pub commitment_term: f64,
    pub perceptual: f64,
    /// Unweighted generator hinge loss; zero while the term is inactive.
    pub adversarial_g: f64,
    pub lambda_adv: f64,
    /// Signed, gamma-weighted entropy contribution.
    pub entropy_term: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recomposed(&self) -> f64 {
        self.recon_l1
            + self.codebook_term
            + self.commitment_term
            + self.perceptual
            + self.lambda_adv * self.adversarial_g
            + self.entropy_term
    }
}

/// Everything [`assemble_loss`] may consume for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub x: &'a Tensor,
    pub x_hat: &'a Tensor,
    pub latent: Option<&'a LatentGrid>,
    pub quant: Option<&'a QuantizedGrid>,
    pub usage: Option<&'a UsageDistribution>,
    /// Discriminator logits on `x_hat`, when the adversarial term is active.
    pub disc_fake: Option<&'a Tensor>,
    pub encoder_frozen: bool,
}

/// Differentiable total and its scalar breakdown.
#[derive(Debug, Clone)]
pub struct AssembledLoss {
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Phase 1: L1 + codebook + commitment + perceptual + adversarial + entropy.
/// Phase 2: L1 + perceptual + adversarial, with the encoder frozen.
pub fn assemble_loss(phase: Phase, proxy: &ProxyNet, inp: LossInputs<'_>, cfg: &LossConfig) -> Result<AssembledLoss> {
    cfg.validate()?;
    if phase == Phase::Phase2 && !inp.encoder_frozen {
        return Err(Error::Contract("phase-2 loss requested with a trainable encoder".into()));
    }
    let mut report = LossReport {
        lambda_adv: cfg.lambda_adv,
        ..LossReport::default()
    };
    let recon = (inp.x - inp.x_hat)?.abs()?.mean_all()?;
    report.recon_l1 = scalar(&recon)?;
    let perc = spec_perceptual(proxy, inp.x, inp.x_hat, &cfg.perceptual)?;
    report.perceptual = scalar(&perc)?;
    let mut total = (recon + perc)?;

    if phase == Phase::Phase1 {
        let (latent, quant, usage) = match (inp.latent, inp.quant, inp.usage) {
            (Some(l), Some(q), Some(u)) => (l, q, u),
            _ => return Err(Error::Contract("phase-1 loss needs latent, quantized grid and usage".into())),
        };
        let (cb, commit) = vq_latent_losses(latent, quant, cfg.beta)?;
        report.codebook_term = scalar(&cb)?;
        report.commitment_term = scalar(&commit)?;
        total = ((total + cb)? + commit)?;
        if cfg.gamma > 0.0 {
            let ent = entropy_regularizer(usage, cfg.gamma, cfg.entropy_sign)?;
            report.entropy_term = scalar(&ent)?;
            total = (total + ent)?;
        }
    }

    if let (Some(fake), true) = (inp.disc_fake, cfg.lambda_adv > 0.0) {
        let g = hinge_g_loss(fake)?;
        report.adversarial_g = scalar(&g)?;
        total = (total + (g * cfg.lambda_adv)?)?;
    }

    report.total = scalar(&total)?;
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite tokenizer loss: {report:?}")));
    }
    debug_assert!(
        (report.total - report.recomposed()).abs() <= 1e-5 * (1.0 + report.total.abs()),
        "loss decomposition drifted: {report:?}"
    );
    Ok(AssembledLoss { total, report })
}

#[cfg(test)]
mod tests;
